//! Online tracking with a frozen feature extractor and a moving-average
//! correlation filter.

use std::io::Write;
use std::path::Path;

use crate::dcf::{PackedFilter, PackedSpectrum, RegConfig, SpectralFilter};
use crate::error::{Error, Result};
use crate::features::{extract_into, ExtractOptions, Lrn, NetParams, Precision};
use crate::imgproc::{crop_side, crop_square, gaussian_label, gray_to_rgb, hann_window, label_sigma, BBox, Frame};
use crate::planes::{FeatureMap, Patch, Planes};
use crate::spectral::{dft2, idft2_re_planes, ComplexPlane, RealPlane};

/// Tracker settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Moving-average rate of the filter update.
    pub alpha: f64,
    /// Base of the scale pyramid.
    pub scale_step: f64,
    /// Pyramid exponents, searched in this order.
    pub scales: Vec<i32>,
    pub reg: RegConfig,
    /// Label bandwidth in cells; `None` derives it from the target extent.
    pub sigma: Option<f64>,
    pub context: f64,
    pub out_size: usize,
    /// Apply a Hann window to feature maps before the DCF.
    pub window: bool,
    pub lrn: Option<Lrn>,
    pub precision: Precision,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            alpha: 0.01,
            scale_step: 1.015,
            scales: vec![-1, 0, 1],
            reg: RegConfig::default(),
            sigma: None,
            context: 2.0,
            out_size: 125,
            window: true,
            lrn: Some(Lrn::CLASSIC),
            precision: Precision::F32,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.scale_step > 0.0) {
            return Err(Error::Config("scale step must be positive".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.out_size == 0 || !(self.context >= 0.0) {
            return Err(Error::Config("bad patch geometry".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn label_sigma(&self) -> f64 {
        self.sigma
            .unwrap_or_else(|| label_sigma(self.out_size, self.context))
    }

    fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            lrn: self.lrn,
            precision: self.precision,
        }
    }
}

/// Converts a response cell to a circular displacement: indices past half
/// the size wrap to negative offsets.
pub fn wrap_displacement(cell: (usize, usize), dims: (usize, usize)) -> (isize, isize) {
    let wrap = |i: usize, n: usize| {
        if i > n / 2 {
            i as isize - n as isize
        } else {
            i as isize
        }
    };
    (wrap(cell.0, dims.0), wrap(cell.1, dims.1))
}

/// Outcome of searching one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    /// Index into [`TrackerConfig::scales`].
    pub scale_index: usize,
    pub cell: (usize, usize),
    pub displacement: (isize, isize),
    pub peak: f64,
}

/// Reusable buffers for one tracker.
#[derive(Debug)]
struct Workspace {
    feat: FeatureMap,
    spectrum: Option<PackedSpectrum>,
    responses: Vec<ComplexPlane>,
}

impl Workspace {
    /// Crops a square of `side` pixels around `(cx, cy)` and refreshes the
    /// spectrum with its windowed features.
    fn features_at(
        &mut self,
        frame: &Frame,
        (cx, cy, side): (f64, f64, f64),
        theta: &NetParams,
        cfg: &TrackerConfig,
        window: Option<&RealPlane>,
    ) -> Result<&PackedSpectrum> {
        let patch = net_input(crop_square(frame.planes(), cx, cy, side, cfg.out_size)?);
        extract_into(&patch, theta, &cfg.extract_options(), &mut self.feat)?;
        match &mut self.spectrum {
            Some(s) => s.refill(&self.feat, window)?,
            None => self.spectrum = Some(PackedSpectrum::with_precision(&self.feat, window, cfg.precision)?),
        }
        Ok(self.spectrum.as_ref().expect("just computed"))
    }
}

/// A running tracker.
#[derive(Debug)]
pub struct TrackerState {
    filter: PackedFilter,
    bbox: BBox,
    theta: NetParams,
    config: TrackerConfig,
    window: Option<RealPlane>,
    label_hat: ComplexPlane,
    last: Option<Localization>,
    work: Workspace,
}

fn net_input(p: Patch) -> Patch {
    if p.channels() == 1 {
        gray_to_rgb(&p)
    } else {
        p
    }
}

impl TrackerState {
    /// The current filter with its channels separated.
    pub fn filter(&self) -> SpectralFilter {
        self.filter.unpack()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Search result of the latest [`step`].
    pub fn last_localization(&self) -> Option<Localization> {
        self.last
    }

    fn features_at(&mut self, frame: &Frame, cx: f64, cy: f64, side: f64) -> Result<()> {
        let window = self.window.as_ref();
        self.work
            .features_at(frame, (cx, cy, side), &self.theta, &self.config, window)?;
        Ok(())
    }

    /// Response maps of the current filter at every pyramid level.
    pub fn responses(&mut self, frame: &Frame) -> Result<Planes> {
        let side = crop_side(&self.bbox, self.config.context);
        let (cx, cy) = (self.bbox.cx, self.bbox.cy);
        let scales = self.config.scales.clone();
        for (i, &s) in scales.iter().enumerate() {
            let factor = self.config.scale_step.powi(s);
            self.features_at(frame, cx, cy, side * factor)?;
            let spec = self.work.spectrum.as_ref().expect("just computed");
            let r = self.filter.response_spectrum(spec)?;
            if i < self.work.responses.len() {
                self.work.responses[i] = r;
            } else {
                self.work.responses.push(r);
            }
        }
        self.work.responses.truncate(scales.len());
        idft2_re_planes(&self.work.responses)
    }
}

fn check_bbox(frame: &Frame, bbox: &BBox) -> Result<()> {
    bbox.validate()?;
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    if bbox.cx < 0.0 || bbox.cy < 0.0 || bbox.cx > w || bbox.cy > h {
        return Err(Error::InvalidInput(format!(
            "box center ({}, {}) lies outside the {}x{} frame",
            bbox.cx, bbox.cy, frame.width(), frame.height()
        )));
    }
    Ok(())
}

/// Learns the first filter from `bbox` in `frame`.
pub fn init(frame: &Frame, bbox: BBox, theta: &NetParams, cfg: &TrackerConfig) -> Result<TrackerState> {
    cfg.validate()?;
    check_bbox(frame, &bbox)?;
    let n = cfg.out_size;
    let label_hat = dft2(&gaussian_label(n, n, 0, 0, cfg.label_sigma()))?;
    let window = cfg.window.then(|| hann_window(n, n));
    let mut work = Workspace {
        feat: Planes::zeros(theta.shape().out, n, n),
        spectrum: None,
        responses: Vec::new(),
    };
    let region = (bbox.cx, bbox.cy, crop_side(&bbox, cfg.context));
    let spec = work.features_at(frame, region, theta, cfg, window.as_ref())?;
    let filter = PackedFilter::solve(spec, &label_hat, &cfg.reg)?;
    Ok(TrackerState {
        filter,
        bbox,
        theta: theta.clone(),
        config: cfg.clone(),
        window,
        label_hat,
        last: None,
        work,
    })
}

/// Locates the target in `frame`, updates scale and filter, and returns the
/// new box.
pub fn step(state: &mut TrackerState, frame: &Frame) -> Result<BBox> {
    let responses = state.responses(frame)?;
    let n = state.config.out_size;
    let mut best: Option<Localization> = None;
    for i in 0..responses.channels() {
        let plane = responses.channel(i);
        let mut idx = 0;
        for (j, &v) in plane.iter().enumerate() {
            if v > plane[idx] {
                idx = j;
            }
        }
        let peak = plane[idx];
        if !peak.is_finite() {
            return Err(Error::NonFinite("response map".into()));
        }
        if best.is_none_or(|b| peak > b.peak) {
            let cell = (idx / n, idx % n);
            best = Some(Localization {
                scale_index: i,
                cell,
                displacement: wrap_displacement(cell, (n, n)),
                peak,
            });
        }
    }
    let loc = best.expect("at least one scale");
    let factor = state.config.scale_step.powi(state.config.scales[loc.scale_index]);
    let cell_px = crop_side(&state.bbox, state.config.context) * factor / n as f64;
    let b = state.bbox;
    let cx = (b.cx + loc.displacement.1 as f64 * cell_px).clamp(0.0, frame.width() as f64);
    let cy = (b.cy + loc.displacement.0 as f64 * cell_px).clamp(0.0, frame.height() as f64);
    state.bbox = BBox::new(cx, cy, b.w * factor, b.h * factor);
    state.last = Some(loc);

    let side = crop_side(&state.bbox, state.config.context);
    let window = state.window.as_ref();
    let spec = state
        .work
        .features_at(frame, (cx, cy, side), &state.theta, &state.config, window)?;
    state
        .filter
        .blend(spec, &state.label_hat, &state.config.reg, state.config.alpha)?;
    Ok(state.bbox)
}

/// Tracks through `frames`, returning one box per frame (the first is
/// `init_bbox`).
pub fn run_sequence(
    frames: &[Frame],
    init_bbox: BBox,
    theta: &NetParams,
    cfg: &TrackerConfig,
) -> Result<Vec<BBox>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("empty sequence".into()))?;
    let mut state = init(first, init_bbox, theta, cfg)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(init_bbox);
    for f in &frames[1..] {
        out.push(step(&mut state, f)?);
    }
    Ok(out)
}

/// Writes `x,y,w,h` lines (top-left corner, pixels).
pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut out = Vec::new();
    for b in boxes {
        let [x, y, w, h] = b.to_xywh();
        writeln!(out, "{x:.4},{y:.4},{w:.4},{h:.4}").expect("writing to memory");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a box file written by [`write_boxes`] (or any `x,y,w,h` list;
/// blank lines are skipped, and tabs or spaces may separate values).
pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(format!("not a number: {s:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(parse_err(format!("expected 4 values, got {}", vals.len())));
        }
        let b = BBox::from_xywh(vals[0], vals[1], vals[2], vals[3]);
        b.validate().map_err(|e| parse_err(e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

/// Draws box outlines into a copy of `frame` (red on color frames).
pub fn draw_box(frame: &Frame, b: &BBox) -> Result<Frame> {
    let mut planes = frame.planes().clone();
    let (ch, h, w) = planes.shape();
    let [x, y, bw, bh] = b.to_xywh();
    let clampi = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi - 1);
    let (x0, x1) = (clampi(x, w), clampi(x + bw - 1.0, w));
    let (y0, y1) = (clampi(y, h), clampi(y + bh - 1.0, h));
    let color: [f64; 3] = [1.0, 0.0, 0.0];
    for c in 0..ch {
        let v = if ch == 3 { color[c] } else { 1.0 };
        for xx in x0..=x1 {
            planes.set(c, y0, xx, v);
            planes.set(c, y1, xx, v);
        }
        for yy in y0..=y1 {
            planes.set(c, yy, x0, v);
            planes.set(c, yy, x1, v);
        }
    }
    Frame::new(planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcf::solve_filter;
    use crate::features::{extract, NetShape};
    use crate::imgproc::{apply_window, crop_patch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture evaluated at continuous coordinates.
    struct Texture {
        waves: Vec<(f64, f64, f64, f64, usize)>,
    }

    impl Texture {
        fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let waves = (0..24)
                .map(|i| {
                    let f = rng.random_range(0.02..0.15);
                    let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    (f * th.cos(), f * th.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0), i % 3)
                })
                .collect();
            Texture { waves }
        }

        fn at(&self, c: usize, x: f64, y: f64) -> f64 {
            let mut v = 0.0;
            let mut norm = 0.0;
            for &(fx, fy, ph, amp, ch) in &self.waves {
                let gain = if ch == c { amp } else { 0.5 * amp };
                v += gain * (fx * x + fy * y + ph).sin();
                norm += gain;
            }
            0.5 + 0.5 * v / norm
        }

        /// A textured `tw × th` rectangle centred at `(cx, cy)` and magnified
        /// by `zoom`, on a flat grey background.
        fn scene(&self, (w, h): (usize, usize), (cx, cy): (f64, f64), (tw, th): (f64, f64), zoom: f64) -> Frame {
            Frame::new(Planes::from_fn(3, h, w, |c, r, k| {
                let (u, v) = ((k as f64 - cx) / zoom, (r as f64 - cy) / zoom);
                if u.abs() <= tw / 2.0 && v.abs() <= th / 2.0 {
                    self.at(c, u, v)
                } else {
                    0.5
                }
            }))
            .unwrap()
        }

        /// Frame whose content at `(x, y)` is the texture at `map(x, y)`.
        fn frame(&self, w: usize, h: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Frame {
            Frame::new(Planes::from_fn(3, h, w, |c, r, k| {
                let (x, y) = map(k as f64, r as f64);
                self.at(c, x, y)
            }))
            .unwrap()
        }
    }

    fn theta() -> NetParams {
        NetParams::init(NetShape::FULL, 7)
    }

    #[test]
    fn displacement_wraps_past_half() {
        assert_eq!(wrap_displacement((0, 0), (125, 125)), (0, 0));
        assert_eq!(wrap_displacement((62, 3), (125, 125)), (62, 3));
        assert_eq!(wrap_displacement((63, 124), (125, 125)), (-62, -1));
        assert_eq!(wrap_displacement((2, 3), (4, 4)), (2, -1));
        assert_eq!(wrap_displacement((3, 0), (4, 4)), (-1, 0));
    }

    #[test]
    fn init_filter_is_the_closed_form_solve() {
        let tex = Texture::new(1);
        let frame = tex.frame(160, 120, |x, y| (x, y));
        let bbox = BBox::new(80.0, 60.0, 24.0, 20.0);
        let cfg = TrackerConfig {
            precision: Precision::F64,
            ..Default::default()
        };
        let theta = theta();
        let st = init(&frame, bbox, &theta, &cfg).unwrap();
        let n = cfg.out_size;
        let feat = extract(&crop_patch(&frame, &bbox, cfg.context, n).unwrap(), &theta, &cfg.extract_options()).unwrap();
        let windowed = apply_window(&feat, &hann_window(n, n)).unwrap();
        let label = gaussian_label(n, n, 0, 0, cfg.label_sigma());
        let want = solve_filter(&windowed, &label, &cfg.reg).unwrap();
        let got = st.filter();
        assert_eq!(got.num_channels(), want.num_channels());
        let scale = want.channels().iter().map(ComplexPlane::max_abs).fold(0.0, f64::max);
        for (a, b) in got.channels().iter().zip(want.channels()) {
            for (va, vb) in a.data().iter().zip(b.data()) {
                assert!((va - vb).norm() < 1e-9 * scale);
            }
        }
    }

    #[test]
    fn self_response_peaks_at_origin() {
        let tex = Texture::new(2);
        let frame = tex.frame(160, 120, |x, y| (x, y));
        let cfg = TrackerConfig::default();
        let mut st = init(&frame, BBox::new(70.0, 55.0, 30.0, 30.0), &theta(), &cfg).unwrap();
        let r = st.responses(&frame).unwrap();
        let mid = cfg.scales.iter().position(|&s| s == 0).unwrap();
        let plane = RealPlane::from_vec(cfg.out_size, cfg.out_size, r.channel(mid).to_vec()).unwrap();
        assert_eq!(plane.argmax(), (0, 0));
    }

    #[test]
    fn zero_rate_keeps_filter() {
        let tex = Texture::new(3);
        let cfg = TrackerConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let mut st = init(&tex.frame(160, 120, |x, y| (x, y)), BBox::new(80.0, 60.0, 30.0, 30.0), &theta(), &cfg).unwrap();
        let before = st.filter.clone();
        for t in 1..4 {
            step(&mut st, &tex.frame(160, 120, |x, y| (x - 2.0 * t as f64, y))).unwrap();
        }
        assert_eq!(st.filter, before);
    }

    #[test]
    fn static_scene_does_not_drift() {
        let tex = Texture::new(4);
        let start = BBox::new(100.0, 75.0, 30.0, 26.0);
        let frame = tex.scene((200, 150), (start.cx, start.cy), (start.w, start.h), 1.0);
        let frames = vec![frame; 50];
        let boxes = run_sequence(&frames, start, &theta(), &TrackerConfig::default()).unwrap();
        for b in &boxes {
            assert!((b.cx - start.cx).hypot(b.cy - start.cy) < 1.0, "{b:?}");
        }
    }

    #[test]
    fn follows_steady_translation() {
        let tex = Texture::new(5);
        let (vx, vy) = (3.0, 0.0);
        let size = (30.0, 24.0);
        let start = (50.0, 80.0);
        let centres: Vec<(f64, f64)> = (0..30).map(|t| (start.0 + vx * t as f64, start.1 + vy * t as f64)).collect();
        let frames: Vec<Frame> = centres.iter().map(|&c| tex.scene((200, 160), c, size, 1.0)).collect();
        let boxes = run_sequence(&frames, BBox::new(start.0, start.1, size.0, size.1), &theta(), &TrackerConfig::default()).unwrap();
        let mean_err = boxes
            .iter()
            .zip(&centres)
            .map(|(b, c)| (b.cx - c.0).hypot(b.cy - c.1))
            .sum::<f64>()
            / boxes.len() as f64;
        assert!(mean_err < 2.0, "mean center error {mean_err}");
    }

    #[test]
    fn growing_target_selects_larger_scale() {
        let tex = Texture::new(6);
        let cfg = TrackerConfig::default();
        let rate: f64 = 1.015;
        let (cx, cy) = (100.0, 80.0);
        let frames: Vec<Frame> = (0..20)
            .map(|t| tex.scene((200, 160), (cx, cy), (30.0, 30.0), rate.powi(t)))
            .collect();
        let mut st = init(&frames[0], BBox::new(cx, cy, 30.0, 30.0), &theta(), &cfg).unwrap();
        let up = cfg.scales.iter().position(|&s| s == 1).unwrap();
        let mut picks = 0;
        for f in &frames[1..] {
            step(&mut st, f).unwrap();
            picks += usize::from(st.last_localization().unwrap().scale_index == up);
        }
        assert!(picks * 2 > frames.len() - 1, "{picks} of {}", frames.len() - 1);
    }

    mod props {
        use super::*;
        use crate::dcf::{respond, solve_filter};
        use proptest::prelude::{any, prop_assert_eq, prop_assume, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn circular_shift_maps_to_exact_displacement(
                seed in any::<u64>(),
                n in 8usize..=33,
                dr in -16isize..=16,
                dc in -16isize..=16,
            ) {
                prop_assume!(2 * dr.unsigned_abs() < n && 2 * dc.unsigned_abs() < n);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Planes::from_fn(4, n, n, |_, _, _| rng.random_range(-1.0..1.0));
                let label = gaussian_label(n, n, 0, 0, 1.5);
                let f = solve_filter(&x, &label, &RegConfig::default()).unwrap();
                let r = respond(&f, &x.circshift(dr, dc)).unwrap();
                prop_assert_eq!(wrap_displacement(r.argmax(), (n, n)), (dr, dc));
            }
        }
    }

    #[test]
    fn box_files_round_trip_and_reject_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.txt");
        let boxes = vec![BBox::from_xywh(1.5, 2.25, 10.0, 12.0), BBox::from_xywh(0.0, 0.0, 3.0, 4.0)];
        write_boxes(&path, &boxes).unwrap();
        let back = read_boxes(&path).unwrap();
        for (a, b) in back.iter().zip(&boxes) {
            assert!((a.cx - b.cx).abs() < 1e-4 && (a.w - b.w).abs() < 1e-4);
        }
        std::fs::write(&path, "1 2 3 4\n\n5\t6,7,8\n").unwrap();
        assert_eq!(read_boxes(&path).unwrap().len(), 2);
        std::fs::write(&path, "1,2,3\n").unwrap();
        assert!(matches!(read_boxes(&path), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&path, "1,2,x,4\n").unwrap();
        assert!(read_boxes(&path).is_err());
    }

    #[test]
    fn rejects_bad_configuration_and_boxes() {
        let frame = Texture::new(7).frame(40, 30, |x, y| (x, y));
        let theta = theta();
        let bad = TrackerConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(init(&frame, BBox::new(20.0, 15.0, 8.0, 8.0), &theta, &bad).is_err());
        let cfg = TrackerConfig::default();
        assert!(init(&frame, BBox::new(90.0, 15.0, 8.0, 8.0), &theta, &cfg).is_err());
        assert!(init(&frame, BBox::new(20.0, 15.0, 0.0, 8.0), &theta, &cfg).is_err());
        assert!(run_sequence(&[], BBox::new(20.0, 15.0, 8.0, 8.0), &theta, &cfg).is_err());
    }

    #[test]
    fn drawn_box_marks_the_outline() {
        let frame = Frame::new(Planes::zeros(3, 20, 20)).unwrap();
        let out = draw_box(&frame, &BBox::from_xywh(5.0, 5.0, 6.0, 4.0)).unwrap();
        assert_eq!(out.planes().get(0, 5, 5), 1.0);
        assert_eq!(out.planes().get(1, 5, 5), 0.0);
        assert_eq!(out.planes().get(0, 8, 10), 1.0);
        assert_eq!(out.planes().get(0, 6, 7), 0.0);
    }
}
