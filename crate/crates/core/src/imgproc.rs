//! Frames, boxes, cropping, labels, windows and entropy.
//!
//! Pixel coordinates are continuous: pixel `(row, col)` covers
//! `[col, col+1) × [row, row+1)` and its center sits at `(col+0.5, row+0.5)`.
//! A [`BBox`] is expressed in the same coordinates.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::planes::{Patch, Planes};
use crate::spectral::RealPlane;

/// Luma weights used for grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A video frame with intensities in `[0, 1]` and 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    planes: Planes,
}

impl Frame {
    pub fn new(planes: Planes) -> Result<Self> {
        if planes.channels() != 1 && planes.channels() != 3 {
            return Err(Error::InvalidInput(format!(
                "frames have 1 or 3 channels, got {}",
                planes.channels()
            )));
        }
        if planes.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "frame intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Frame { planes })
    }

    pub fn planes(&self) -> &Planes {
        &self.planes
    }

    pub fn channels(&self) -> usize {
        self.planes.channels()
    }

    pub fn height(&self) -> usize {
        self.planes.height()
    }

    pub fn width(&self) -> usize {
        self.planes.width()
    }

    /// Single-channel luma version of this frame.
    pub fn to_gray(&self) -> Frame {
        Frame {
            planes: to_gray(&self.planes),
        }
    }
}

/// Axis-aligned box given by its center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// From top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    /// Top-left corner and size.
    pub fn to_xywh(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.w,
            self.h,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidInput(format!(
                "degenerate box {}x{}",
                self.w, self.h
            )));
        }
        if ![self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("box".into()));
        }
        Ok(())
    }

    /// Whether the box lies entirely within a `width × height` frame.
    pub fn inside(&self, width: usize, height: usize) -> bool {
        let [x, y, w, h] = self.to_xywh();
        let eps = 1e-9;
        x >= -eps && y >= -eps && x + w <= width as f64 + eps && y + h <= height as f64 + eps
    }
}

/// Side of the square region sampled around a box with the given context.
pub fn crop_side(b: &BBox, context: f64) -> f64 {
    b.w.max(b.h) * (1.0 + context)
}

/// Label bandwidth: a tenth of the target extent in output cells.
pub fn label_sigma(out_size: usize, context: f64) -> f64 {
    0.1 * out_size as f64 / (1.0 + context)
}

/// Bilinear sampling positions along one axis with edge replication.
fn axis_taps(center: f64, side: f64, out: usize, len: usize) -> Vec<(usize, usize, f64)> {
    let start = center - side / 2.0;
    let step = side / out as f64;
    let last = len as f64 - 1.0;
    (0..out)
        .map(|j| {
            let u = start + (j as f64 + 0.5) * step - 0.5;
            let u = u.clamp(0.0, last);
            let i0 = u.floor();
            let t = u - i0;
            let i0 = i0 as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, t)
        })
        .collect()
}

/// Samples a square of side `side` centered at `(cx, cy)` to `out × out`.
pub fn crop_square(
    frame: &Planes,
    cx: f64,
    cy: f64,
    side: f64,
    out_size: usize,
) -> Result<Patch> {
    if !(side > 0.0) || !side.is_finite() || !cx.is_finite() || !cy.is_finite() {
        return Err(Error::InvalidInput(format!(
            "bad crop square ({cx}, {cy}) side {side}"
        )));
    }
    if out_size == 0 {
        return Err(Error::InvalidInput("crop output size must be positive".into()));
    }
    let (ch, h, w) = frame.shape();
    let xs = axis_taps(cx, side, out_size, w);
    let ys = axis_taps(cy, side, out_size, h);
    let mut patch = Planes::zeros(ch, out_size, out_size);
    for c in 0..ch {
        let src = frame.channel(c);
        let dst = patch.channel_mut(c);
        for (r, &(y0, y1, ty)) in ys.iter().enumerate() {
            let row0 = &src[y0 * w..(y0 + 1) * w];
            let row1 = &src[y1 * w..(y1 + 1) * w];
            let out = &mut dst[r * out_size..(r + 1) * out_size];
            for (o, &(x0, x1, tx)) in out.iter_mut().zip(&xs) {
                let top = row0[x0] + (row0[x1] - row0[x0]) * tx;
                let bot = row1[x0] + (row1[x1] - row1[x0]) * tx;
                *o = top + (bot - top) * ty;
            }
        }
    }
    Ok(patch)
}

/// Crops the context region around `b` and resizes it to `out_size²`.
///
/// The region is square with side `max(w, h)·(1 + context)`; pixels outside
/// the frame replicate the nearest edge.
pub fn crop_patch(frame: &Frame, b: &BBox, context: f64, out_size: usize) -> Result<Patch> {
    b.validate()?;
    if !(context >= 0.0) {
        return Err(Error::InvalidInput(format!("context must be >= 0, got {context}")));
    }
    crop_square(&frame.planes, b.cx, b.cy, crop_side(b, context), out_size)
}

/// Gaussian with circular (wrap-around) distances to the peak.
pub fn gaussian_label(
    height: usize,
    width: usize,
    peak_row: usize,
    peak_col: usize,
    sigma: f64,
) -> RealPlane {
    assert!(peak_row < height && peak_col < width, "peak outside label");
    assert!(sigma > 0.0, "sigma must be positive");
    let wrap = |i: usize, p: usize, n: usize| {
        let d = (i as isize - p as isize).rem_euclid(n as isize) as usize;
        d.min(n - d) as f64
    };
    let k = -0.5 / (sigma * sigma);
    let rows: Vec<f64> = (0..height)
        .map(|r| {
            let d = wrap(r, peak_row, height);
            (k * d * d).exp()
        })
        .collect();
    let cols: Vec<f64> = (0..width)
        .map(|c| {
            let d = wrap(c, peak_col, width);
            (k * d * d).exp()
        })
        .collect();
    RealPlane::from_fn(height, width, |r, c| rows[r] * cols[c])
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Separable raised-cosine window: zero on the border, one at the center.
pub fn hann_window(height: usize, width: usize) -> RealPlane {
    let (rows, cols) = (hann(height), hann(width));
    RealPlane::from_fn(height, width, |r, c| rows[r] * cols[c])
}

/// Multiplies every channel by `window`.
pub fn apply_window(p: &Planes, window: &RealPlane) -> Result<Planes> {
    if (p.height(), p.width()) != window.dims() {
        return Err(Error::dims(
            format!("{:?}", window.dims()),
            format!("{}x{}", p.height(), p.width()),
        ));
    }
    let mut out = p.clone();
    apply_window_in_place(&mut out, window);
    Ok(out)
}

pub(crate) fn apply_window_in_place(p: &mut Planes, window: &RealPlane) {
    for c in 0..p.channels() {
        for (v, w) in p.channel_mut(c).iter_mut().zip(window.data()) {
            *v *= w;
        }
    }
}

/// Luma conversion of a 3-channel stack; 1-channel input is copied.
pub fn to_gray(p: &Planes) -> Planes {
    if p.channels() != 3 {
        return Planes::from_vec(1, p.height(), p.width(), p.channel(0).to_vec())
            .expect("non-empty");
    }
    let n = p.plane_len();
    let mut out = vec![0.0; n];
    for (c, weight) in LUMA.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(p.channel(c)) {
            *o += weight * v;
        }
    }
    Planes::from_vec(1, p.height(), p.width(), out).expect("non-empty")
}

/// Replicates a single-channel stack to three channels.
pub fn gray_to_rgb(p: &Planes) -> Planes {
    if p.channels() == 3 {
        return p.clone();
    }
    let mut data = Vec::with_capacity(3 * p.plane_len());
    for _ in 0..3 {
        data.extend_from_slice(p.channel(0));
    }
    Planes::from_vec(3, p.height(), p.width(), data).expect("non-empty")
}

/// Shannon entropy (bits) of the 256-bin intensity histogram.
pub fn entropy(p: &Planes) -> f64 {
    let gray = to_gray(p);
    let mut hist = [0usize; 256];
    for &v in gray.data() {
        let bin = (v * 255.0).round().clamp(0.0, 255.0) as usize;
        hist[bin] += 1;
    }
    let n = gray.data().len() as f64;
    hist.iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let q = k as f64 / n;
            -q * q.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Decodes an 8-bit PNG or portable-pixmap image into a frame.
pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let planes = if img.color().has_color() {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f64 / 255.0;
            }
        }
        Planes::from_vec(3, h, w, data)?
    } else {
        let g = img.to_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        let data = g.pixels().map(|p| p[0] as f64 / 255.0).collect();
        Planes::from_vec(1, h, w, data)?
    };
    Frame::new(planes)
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes a frame as an 8-bit image; the format follows the extension.
pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let p = frame.planes();
    let res = if frame.channels() == 3 {
        let mut buf = Vec::with_capacity(3 * w * h);
        for i in 0..w * h {
            for c in 0..3 {
                buf.push(to_u8(p.channel(c)[i]));
            }
        }
        image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized")
            .save(path)
    } else {
        let buf = p.channel(0).iter().map(|&v| to_u8(v)).collect();
        image::GrayImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized")
            .save(path)
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

const FRAME_EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pnm", "pbm"];

/// Image files of a sequence directory in frame order.
///
/// Files are ordered by the integer value of the digits in their stem
/// (`frame_000010.png` comes after `frame_000009.png`; zero padding is
/// optional), then by name. Files whose stem has no digits sort last by
/// name. Only png/ppm/pgm/pnm/pbm files are considered.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort_by_key(|p| {
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        let num = digits.parse::<u128>().ok();
        (num.is_none(), num.unwrap_or(0), stem)
    });
    Ok(files)
}

/// Loads every frame of a sequence directory.
pub fn load_sequence(dir: &Path) -> Result<Vec<Frame>> {
    let files = list_frames(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no frames found in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| load_frame(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Frame {
        Frame::new(Planes::from_fn(1, h, w, |_, r, c| f(r, c))).unwrap()
    }

    #[test]
    fn identity_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Frame::new(Planes::from_fn(3, 9, 9, |_, _, _| rng.random_range(0.0..1.0))).unwrap();
        let b = BBox::new(4.5, 4.5, 9.0, 9.0);
        let p = crop_patch(&f, &b, 0.0, 9).unwrap();
        for (a, b) in p.data().iter().zip(f.planes().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_two_triples_the_side() {
        let b = BBox::new(100.0, 80.0, 40.0, 40.0);
        assert_eq!(crop_side(&b, 2.0), 120.0);
        let tall = BBox::new(0.0, 0.0, 10.0, 30.0);
        assert_eq!(crop_side(&tall, 2.0), 90.0);
    }

    #[test]
    fn ramp_stays_linear_under_resize() {
        let f = frame_from_fn(64, 64, |r, c| (0.3 * c as f64 + 0.7 * r as f64) / 70.0);
        // Region well inside the frame so no edge replication happens.
        let b = BBox::new(32.0, 30.0, 10.0, 10.0);
        let out = 17;
        let p = crop_patch(&f, &b, 1.0, out).unwrap();
        let side = 20.0;
        let step = side / out as f64;
        for r in 0..out {
            for c in 0..out {
                let x = 32.0 - side / 2.0 + (c as f64 + 0.5) * step - 0.5;
                let y = 30.0 - side / 2.0 + (r as f64 + 0.5) * step - 0.5;
                let want = (0.3 * x + 0.7 * y) / 70.0;
                assert!((p.get(0, r, c) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn crops_replicate_edges() {
        let f = frame_from_fn(4, 4, |r, c| (r * 4 + c) as f64 / 16.0);
        let p = crop_patch(&f, &BBox::new(0.0, 0.0, 2.0, 2.0), 1.0, 4).unwrap();
        // Top-left output pixel samples far outside the frame.
        assert_eq!(p.get(0, 0, 0), f.planes().get(0, 0, 0));
        assert!(crop_patch(&f, &BBox::new(1.0, 1.0, 0.0, 2.0), 1.0, 4).is_err());
    }

    #[test]
    fn crop_round_trip_center_pixel() {
        let f = frame_from_fn(40, 40, |r, c| {
            0.5 + 0.3 * ((r as f64) / 7.0).sin() * ((c as f64) / 9.0).cos()
        });
        // Odd output, pixel-aligned center: the center cell samples (cx, cy) exactly.
        let b = BBox::new(20.5, 18.5, 6.0, 6.0);
        let p = crop_patch(&f, &b, 2.0, 17).unwrap();
        assert!((p.get(0, 8, 8) - f.planes().get(0, 18, 20)).abs() < 1e-6);
        // Cropping the patch back at its own scale recovers that value.
        let pf = Frame::new(p.clone()).unwrap();
        let back = crop_patch(&pf, &BBox::new(8.5, 8.5, 17.0, 17.0), 0.0, 17).unwrap();
        assert!((back.get(0, 8, 8) - p.get(0, 8, 8)).abs() < 1e-6);
    }

    #[test]
    fn label_peak_and_sigma_point() {
        let y = gaussian_label(16, 16, 0, 0, 2.0);
        assert_eq!(y.get(0, 0), 1.0);
        assert!((y.get(2, 0) - (-0.5f64).exp()).abs() < 1e-15);
        // Wrap-around: distance from row 15 to row 0 is 1.
        assert!((y.get(15, 0) - y.get(1, 0)).abs() < 1e-15);
        assert_eq!(y.argmax(), (0, 0));
        assert!(y.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn label_sum_matches_direct_summation() {
        let (n, sigma) = (125usize, 2.5);
        let y = gaussian_label(n, n, 0, 0, sigma);
        let mut want = 0.0;
        for r in 0..n {
            for c in 0..n {
                let dr = (r.min(n - r)) as f64;
                let dc = (c.min(n - c)) as f64;
                want += (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            }
        }
        assert!((y.sum() - want).abs() < 1e-9);
    }

    #[test]
    fn label_is_shift_equivariant() {
        let base = gaussian_label(11, 13, 0, 0, 1.7);
        for (pr, pc) in [(3, 5), (10, 12), (0, 7)] {
            let moved = gaussian_label(11, 13, pr, pc, 1.7);
            let shifted = base.circshift(pr as isize, pc as isize);
            for (a, b) in moved.data().iter().zip(shifted.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn window_shape() {
        let w = hann_window(9, 9);
        assert_eq!(w.get(4, 4), 1.0);
        assert_eq!(w.get(0, 0), 0.0);
        assert!(w.get(0, 4).abs() < 1e-15);
        let w4 = hann_window(4, 4);
        let v: Vec<f64> = (0..4)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / 3.0).cos())
            .collect();
        for r in 0..4 {
            for c in 0..4 {
                assert!((w4.get(r, c) - v[r] * v[c]).abs() < 1e-15);
            }
        }
        let p = Planes::from_fn(2, 9, 9, |_, _, _| 2.0);
        let wp = apply_window(&p, &w).unwrap();
        assert_eq!(wp.get(1, 4, 4), 2.0);
        assert_eq!(wp.get(0, 0, 3), 0.0);
    }

    #[test]
    fn entropy_cases() {
        let constant = Planes::from_fn(1, 8, 8, |_, _, _| 0.4);
        assert_eq!(entropy(&constant), 0.0);
        let half = Planes::from_fn(1, 8, 8, |_, r, _| if r < 4 { 0.0 } else { 1.0 });
        assert!((entropy(&half) - 1.0).abs() < 1e-12);
        let uniform = Planes::from_fn(1, 16, 16, |_, r, c| (r * 16 + c) as f64 / 255.0);
        assert!((entropy(&uniform) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let levels: Vec<f64> = (0..64).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let p = Planes::from_vec(1, 8, 8, levels.clone()).unwrap();
        let mut shuffled = levels.clone();
        shuffled.reverse();
        let q = Planes::from_vec(1, 8, 8, shuffled).unwrap();
        assert!((entropy(&p) - entropy(&q)).abs() < 1e-12);
        // Relabel intensities with a bijection applied to all channels alike.
        let relabeled = Planes::from_vec(1, 8, 8, levels.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!((entropy(&p) - entropy(&relabeled)).abs() < 1e-12);
        let rgb = gray_to_rgb(&p);
        assert!((entropy(&rgb) - entropy(&p)).abs() < 1e-12);
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::new(Planes::zeros(2, 3, 3)).is_err());
        assert!(Frame::new(Planes::from_fn(1, 2, 2, |_, _, _| 1.5)).is_err());
    }

    #[test]
    fn frame_files_round_trip_and_sort() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::new(Planes::from_fn(3, 5, 7, |c, r, col| ((c + r * 7 + col) % 256) as f64 / 255.0)).unwrap();
        for name in ["frame_000010.png", "frame_000002.ppm", "frame_000001.png"] {
            save_frame(&dir.path().join(name), &f).unwrap();
        }
        std::fs::write(dir.path().join("groundtruth.txt"), "1,2,3,4\n").unwrap();
        let files = list_frames(dir.path()).unwrap();
        let names: Vec<_> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["frame_000001.png", "frame_000002.ppm", "frame_000010.png"]);
        let back = load_frame(&files[1]).unwrap();
        assert_eq!(back, f);
        let g = f.to_gray();
        save_frame(&dir.path().join("g.pgm"), &g).unwrap();
        assert_eq!(load_frame(&dir.path().join("g.pgm")).unwrap().channels(), 1);
    }
}
