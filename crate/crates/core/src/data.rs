//! Training-data manufacture: RoI selection, curation tracking, trajectory
//! sampling and a synthetic video generator.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::dcf::{respond, solve_filter, update_filter, RegConfig};
use crate::error::{Error, Result};
use crate::imgproc::{
    apply_window, crop_patch, entropy, gaussian_label, hann_window, label_sigma, list_frames, load_frame, save_frame,
    BBox, Frame,
};
use crate::planes::{FeatureMap, Planes};
use crate::tracker::{wrap_displacement, write_boxes};
use crate::unsup::{SampleSource, TrajectorySample};

/// Frames a trajectory is drawn from.
pub const WINDOW: usize = 10;

/// Name of the curated track file inside each video directory.
pub const TRACK_FILE: &str = "track.txt";

/// Ground-truth file written by the synthetic generator.
pub const GT_FILE: &str = "groundtruth.txt";

/// Scenario tags written by the synthetic generator.
pub const TAGS_FILE: &str = "tags.txt";

/// An ordered frame sequence on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSource {
    pub id: String,
    pub frames: Vec<PathBuf>,
    /// `(height, width)` of the first frame.
    pub dims: (usize, usize),
}

impl VideoSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let frames = list_frames(dir)?;
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput(format!("no frames in {}", dir.display())))?;
        let f = load_frame(first)?;
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        Ok(VideoSource {
            id,
            dims: (f.height(), f.width()),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Frame> {
        let path = self
            .frames
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("{}: no frame {index}", self.id)))?;
        let f = load_frame(path)?;
        if (f.height(), f.width()) != self.dims {
            return Err(Error::dims(
                format!("{:?}", self.dims),
                format!("{:?} in {}", (f.height(), f.width()), path.display()),
            ));
        }
        Ok(f)
    }

    pub fn load_all(&self) -> Result<Vec<Frame>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Video directories under `root` (each immediate subdirectory holding at
/// least one frame), ordered by id.
pub fn list_videos(root: &Path) -> Result<Vec<VideoSource>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    let mut videos = Vec::new();
    for d in dirs {
        if !list_frames(&d)?.is_empty() {
            videos.push(VideoSource::open(&d)?);
        }
    }
    Ok(videos)
}

/// Geometry of the RoI candidate grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiGrid {
    /// Boxes per axis.
    pub size: usize,
    /// Box side relative to the smaller frame dimension.
    pub side: f64,
    /// Central fraction of each axis the boxes span.
    pub span: f64,
}

impl Default for RoiGrid {
    fn default() -> Self {
        RoiGrid {
            size: 5,
            side: 1.0 / 3.0,
            span: 0.6,
        }
    }
}

/// Candidate boxes in row-major grid order.
pub fn roi_candidates(height: usize, width: usize, grid: &RoiGrid) -> Result<Vec<BBox>> {
    if grid.size == 0 || !(grid.side > 0.0) || !(grid.span > 0.0 && grid.span <= 1.0) {
        return Err(Error::Config(format!("bad RoI grid {grid:?}")));
    }
    let side = (height.min(width) as f64 * grid.side).floor();
    if side < 2.0 {
        return Err(Error::InvalidInput(format!("frame {width}x{height} is too small for the RoI grid")));
    }
    let centers = |len: usize| -> Result<Vec<f64>> {
        let len = len as f64;
        let extent = grid.span * len;
        if extent < side {
            return Err(Error::InvalidInput("RoI boxes do not fit the central region".into()));
        }
        let start = (len - extent) / 2.0 + side / 2.0;
        let stride = if grid.size > 1 {
            (extent - side) / (grid.size - 1) as f64
        } else {
            0.0
        };
        Ok((0..grid.size).map(|i| start + i as f64 * stride).collect())
    };
    let (ys, xs) = (centers(height)?, centers(width)?);
    Ok(ys
        .iter()
        .flat_map(|&cy| xs.iter().map(move |&cx| BBox::new(cx, cy, side, side)))
        .collect())
}

/// Pixels covered by `b`, rounded to whole pixels and clipped to the frame.
pub fn region(frame: &Frame, b: &BBox) -> Result<Planes> {
    let p = frame.planes();
    let (ch, h, w) = p.shape();
    let [x, y, bw, bh] = b.to_xywh();
    let (x0, y0) = (x.round().max(0.0) as usize, y.round().max(0.0) as usize);
    let x1 = ((x + bw).round().max(0.0) as usize).min(w);
    let y1 = ((y + bh).round().max(0.0) as usize).min(h);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::InvalidInput(format!("box {b:?} covers no pixels")));
    }
    Ok(Planes::from_fn(ch, y1 - y0, x1 - x0, |c, r, col| p.get(c, y0 + r, x0 + col)))
}

/// The highest-entropy grid box and its entropy; ties go to the first box
/// in row-major order.
pub fn select_roi(frame: &Frame, grid: &RoiGrid) -> Result<(BBox, f64)> {
    let mut best: Option<(BBox, f64)> = None;
    for b in roi_candidates(frame.height(), frame.width(), grid)? {
        let e = entropy(&region(frame, &b)?);
        if best.is_none_or(|(_, be)| e > be) {
            best = Some((b, e));
        }
    }
    best.ok_or_else(|| Error::InvalidInput("empty RoI grid".into()))
}

/// Settings of the curation tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct KcfConfig {
    pub alpha: f64,
    pub reg: RegConfig,
    pub context: f64,
    /// Cells per side of the search patch.
    pub cells: usize,
}

impl Default for KcfConfig {
    fn default() -> Self {
        KcfConfig {
            alpha: 0.075,
            reg: RegConfig::default(),
            context: 2.0,
            cells: 64,
        }
    }
}

/// Boxes followed through one video by the curation tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct CuratedTrack {
    pub video: String,
    pub boxes: Vec<BBox>,
    /// Entropy (bits) of the seed patch.
    pub entropy: f64,
    /// Frames where the box had to be pulled back inside the frame.
    pub clamped: Vec<bool>,
    /// Directory holding the frames.
    pub frames_dir: PathBuf,
}

impl CuratedTrack {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Writes `frame_index,cx,cy,w,h` lines followed by a `meta` line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (i, b) in self.boxes.iter().enumerate() {
            writeln!(s, "{i},{:.4},{:.4},{:.4},{:.4}", b.cx, b.cy, b.w, b.h).expect("writing to string");
        }
        writeln!(
            s,
            "meta,entropy={:.6},clamped={},video={},frames={}",
            self.entropy,
            self.clamped
                .iter()
                .enumerate()
                .filter(|(_, c)| **c)
                .map(|(i, _)| i.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            self.video,
            self.frames_dir.display()
        )
        .expect("writing to string");
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut boxes = Vec::new();
        let mut meta = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta,") {
                let mut entropy = None;
                let mut video = None;
                let mut frames = None;
                let mut clamped = Vec::new();
                for kv in rest.splitn(4, ',') {
                    match kv.split_once('=') {
                        Some(("entropy", v)) => {
                            entropy = Some(v.parse::<f64>().map_err(|_| err(i + 1, format!("bad entropy {v:?}")))?)
                        }
                        Some(("video", v)) => video = Some(v.to_string()),
                        Some(("frames", v)) => frames = Some(PathBuf::from(v)),
                        Some(("clamped", v)) => {
                            clamped = v
                                .split(';')
                                .filter(|s| !s.is_empty())
                                .map(|s| s.parse::<usize>().map_err(|_| err(i + 1, format!("bad clamped index {s:?}"))))
                                .collect::<Result<Vec<_>>>()?
                        }
                        _ => return Err(err(i + 1, format!("unknown meta field {kv:?}"))),
                    }
                }
                match (entropy, video, frames) {
                    (Some(e), Some(v), Some(f)) => meta = Some((e, v, f, clamped)),
                    _ => return Err(err(i + 1, "meta line needs entropy, video and frames".into())),
                }
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != 5 {
                return Err(err(i + 1, format!("expected 5 fields, got {}", vals.len())));
            }
            let idx: usize = vals[0]
                .parse()
                .map_err(|_| err(i + 1, format!("bad frame index {:?}", vals[0])))?;
            if idx != boxes.len() {
                return Err(err(i + 1, format!("frame index {idx} out of order")));
            }
            let v = vals[1..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| err(i + 1, format!("not a number: {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let b = BBox::new(v[0], v[1], v[2], v[3]);
            b.validate().map_err(|e| err(i + 1, e.to_string()))?;
            boxes.push(b);
        }
        let (entropy, video, frames_dir, flagged) = meta.ok_or_else(|| err(0, "missing meta line".into()))?;
        let mut clamped = vec![false; boxes.len()];
        for i in flagged {
            *clamped
                .get_mut(i)
                .ok_or_else(|| err(0, format!("clamped frame {i} has no box")))? = true;
        }
        Ok(CuratedTrack {
            video,
            clamped,
            boxes,
            entropy,
            frames_dir,
        })
    }
}

/// Moves `b` so it lies inside the frame; returns whether it moved.
fn clamp_box(b: &mut BBox, width: usize, height: usize) -> bool {
    let (w, h) = (b.w.min(width as f64), b.h.min(height as f64));
    let cx = b.cx.clamp(w / 2.0, width as f64 - w / 2.0);
    let cy = b.cy.clamp(h / 2.0, height as f64 - h / 2.0);
    let moved = cx != b.cx || cy != b.cy || w != b.w || h != b.h;
    *b = BBox::new(cx, cy, w, h);
    moved
}

fn kcf_features(frame: &Frame, b: &BBox, cfg: &KcfConfig, window: &crate::spectral::RealPlane) -> Result<FeatureMap> {
    let mut p = crop_patch(frame, b, cfg.context, cfg.cells)?;
    let mean = p.data().iter().sum::<f64>() / p.data().len() as f64;
    p.data_mut().iter_mut().for_each(|v| *v -= mean);
    apply_window(&p, window)
}

/// Follows `seed` through `frames` with a grayscale linear correlation
/// filter at fixed scale.
pub fn kcf_lite_track(frames: &[Frame], seed: BBox, cfg: &KcfConfig) -> Result<(Vec<BBox>, Vec<bool>)> {
    seed.validate()?;
    cfg.reg.validate()?;
    if !(0.0..=1.0).contains(&cfg.alpha) || cfg.cells < 2 {
        return Err(Error::Config(format!("bad curation tracker settings {cfg:?}")));
    }
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("empty video".into()))?;
    let (fw, fh) = (first.width(), first.height());
    if !seed.inside(fw, fh) {
        return Err(Error::InvalidInput(format!("seed box {seed:?} outside the {fw}x{fh} frame")));
    }
    let n = cfg.cells;
    let window = hann_window(n, n);
    let label = gaussian_label(n, n, 0, 0, label_sigma(n, cfg.context));
    let cell = crate::imgproc::crop_side(&seed, cfg.context) / n as f64;
    let gray: Vec<Frame> = frames.iter().map(Frame::to_gray).collect();
    let mut filter = solve_filter(&kcf_features(&gray[0], &seed, cfg, &window)?, &label, &cfg.reg)?;
    let mut boxes = vec![seed];
    let mut flags = vec![false];
    let mut b = seed;
    for f in &gray[1..] {
        if (f.width(), f.height()) != (fw, fh) {
            return Err(Error::dims(format!("{fw}x{fh}"), format!("{}x{}", f.width(), f.height())));
        }
        let r = respond(&filter, &kcf_features(f, &b, cfg, &window)?)?;
        let (dr, dc) = wrap_displacement(r.argmax(), (n, n));
        b.cx += dc as f64 * cell;
        b.cy += dr as f64 * cell;
        flags.push(clamp_box(&mut b, fw, fh));
        let fresh = solve_filter(&kcf_features(f, &b, cfg, &window)?, &label, &cfg.reg)?;
        filter = update_filter(&filter, &fresh, cfg.alpha)?;
        boxes.push(b);
    }
    Ok((boxes, flags))
}

/// Curation settings for a whole corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepareConfig {
    pub grid: RoiGrid,
    pub entropy_floor: f64,
    pub kcf: KcfConfig,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            grid: RoiGrid::default(),
            entropy_floor: 1.0,
            kcf: KcfConfig::default(),
        }
    }
}

/// Selects the RoI of one video and tracks it. Returns `None` when the seed
/// entropy falls below the floor.
pub fn curate(video: &VideoSource, dir: &Path, cfg: &PrepareConfig) -> Result<Option<CuratedTrack>> {
    let frames = video.load_all()?;
    let (seed, e) = select_roi(&frames[0], &cfg.grid)?;
    if e < cfg.entropy_floor {
        return Ok(None);
    }
    let (boxes, clamped) = kcf_lite_track(&frames, seed, &cfg.kcf)?;
    Ok(Some(CuratedTrack {
        video: video.id.clone(),
        boxes,
        entropy: e,
        clamped,
        frames_dir: dir.to_path_buf(),
    }))
}

/// Outcome of curating a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrepareReport {
    pub written: Vec<String>,
    /// Videos dropped by the entropy floor.
    pub low_entropy: Vec<String>,
}

/// Curates every video under `videos_root`, writing `<out>/<id>/track.txt`.
/// Videos are processed on up to `jobs` threads; output does not depend on
/// the thread count.
pub fn prepare(videos_root: &Path, out: &Path, cfg: &PrepareConfig, jobs: usize) -> Result<PrepareReport> {
    let videos = list_videos(videos_root)?;
    if videos.is_empty() {
        return Err(Error::InvalidInput(format!("no videos under {}", videos_root.display())));
    }
    let root = std::fs::canonicalize(videos_root).map_err(|e| Error::io(videos_root, e))?;
    let jobs = jobs.clamp(1, videos.len());
    let chunk = videos.len().div_ceil(jobs);
    let results: Vec<Result<Option<CuratedTrack>>> = std::thread::scope(|s| {
        let handles: Vec<_> = videos
            .chunks(chunk)
            .map(|part| {
                let root = &root;
                s.spawn(move || {
                    part.iter()
                        .map(|v| curate(v, &root.join(&v.id), cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().unwrap_or_else(|_| vec![Err(Error::InvalidInput("worker thread panicked".into()))]))
            .collect()
    });
    let mut report = PrepareReport::default();
    for (v, r) in videos.iter().zip(results) {
        match r? {
            Some(track) => {
                let dir = out.join(&v.id);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                track.write(&dir.join(TRACK_FILE))?;
                report.written.push(v.id.clone());
            }
            None => report.low_entropy.push(v.id.clone()),
        }
    }
    Ok(report)
}

/// Curated tracks under a prepared directory, ordered by video id.
pub fn load_tracks(root: &Path) -> Result<Vec<CuratedTrack>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path().join(TRACK_FILE);
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(|p| CuratedTrack::read(p)).collect()
}

/// Trajectory sampling settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    /// Patches per trajectory, template included.
    pub frames: usize,
    pub window: usize,
    /// Windows drawn per track, per started block of `window` frames.
    pub windows_per_block: usize,
    pub context: f64,
    pub out_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            frames: 4,
            window: WINDOW,
            windows_per_block: 2,
            context: 2.0,
            out_size: 125,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.frames > self.window {
            return Err(Error::Config(format!(
                "trajectories need between 2 and {} frames, got {}",
                self.window, self.frames
            )));
        }
        if self.windows_per_block == 0 || self.out_size == 0 || !(self.context >= 0.0) {
            return Err(Error::Config("bad sampling settings".into()));
        }
        Ok(())
    }
}

/// Which frames of which track form one trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectorySpec {
    pub track: usize,
    /// Strictly increasing; the first is the template.
    pub frames: Vec<usize>,
}

/// Draws `frames` distinct sorted indices from `start..start + window`.
pub fn draw_frames(rng: &mut impl Rng, start: usize, window: usize, frames: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = sample_indices(rng, window, frames).into_iter().map(|i| start + i).collect();
    idx.sort_unstable();
    idx
}

/// Seeded trajectory choice over all tracks. Tracks shorter than one window
/// are skipped.
pub fn sample_trajectories(lengths: &[usize], cfg: &SampleConfig, seed: u64) -> Result<Vec<TrajectorySpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (t, &len) in lengths.iter().enumerate() {
        if len < cfg.window {
            continue;
        }
        let starts = len - cfg.window + 1;
        let count = len.div_ceil(cfg.window) * cfg.windows_per_block;
        for _ in 0..count {
            let start = rng.random_range(0..starts);
            out.push(TrajectorySpec {
                track: t,
                frames: draw_frames(&mut rng, start, cfg.window, cfg.frames),
            });
        }
    }
    Ok(out)
}

/// Trajectories over curated tracks, cropped from disk on demand.
#[derive(Debug, Clone)]
pub struct CorpusSource {
    tracks: Vec<(CuratedTrack, VideoSource)>,
    specs: Vec<TrajectorySpec>,
    context: f64,
    out_size: usize,
}

impl CorpusSource {
    pub fn new(tracks: Vec<CuratedTrack>, cfg: &SampleConfig, seed: u64) -> Result<Self> {
        let mut paired = Vec::with_capacity(tracks.len());
        for t in tracks {
            let v = VideoSource::open(&t.frames_dir)?;
            if v.len() != t.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: {} boxes for {} frames",
                    t.video,
                    t.len(),
                    v.len()
                )));
            }
            paired.push((t, v));
        }
        let lengths: Vec<usize> = paired.iter().map(|(t, _)| t.len()).collect();
        Ok(CorpusSource {
            specs: sample_trajectories(&lengths, cfg, seed)?,
            tracks: paired,
            context: cfg.context,
            out_size: cfg.out_size,
        })
    }

    /// Loads every track under a prepared directory.
    pub fn open(prepared: &Path, cfg: &SampleConfig, seed: u64) -> Result<Self> {
        Self::new(load_tracks(prepared)?, cfg, seed)
    }

    pub fn specs(&self) -> &[TrajectorySpec] {
        &self.specs
    }

    pub fn num_tracks(&self) -> usize {
        self.tracks.len()
    }
}

impl SampleSource for CorpusSource {
    fn len(&self) -> usize {
        self.specs.len()
    }

    fn sample(&self, index: usize) -> Result<TrajectorySample> {
        let spec = self
            .specs
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("sample {index} out of range")))?;
        let (track, video) = &self.tracks[spec.track];
        // Every patch is cut at the template's box, so motion within the
        // window shows up inside the patches.
        let region = track.boxes[spec.frames[0]];
        let mut patches = spec
            .frames
            .iter()
            .map(|&f| crop_patch(&video.load(f)?, &region, self.context, self.out_size))
            .collect::<Result<Vec<_>>>()?;
        let template = patches.remove(0);
        TrajectorySample::new(template, patches, track.video.clone(), spec.frames.clone())
    }
}

/// Synthetic corpus settings, readable from TOML.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    /// Frame side in pixels.
    pub size: usize,
    /// Range of target side lengths.
    pub target_size: [f64; 2],
    /// Range of speeds in pixels per frame.
    pub velocity_range: [f64; 2],
    pub texture_seed: u64,
    /// Add occluder bars to half of the videos.
    pub occlusion: bool,
    /// Fraction of videos with a cluttered background.
    pub clutter: f64,
    /// Largest relative brightness change per frame.
    pub drift: f64,
    /// Range of frames per constant-velocity segment.
    pub segment: [usize; 2],
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
    /// Largest phase speed, in radians per frame, of the waves of a
    /// cluttered background. Zero keeps the background still.
    pub flicker: f64,
    /// Wave amplitude of cluttered backgrounds.
    pub clutter_contrast: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            videos: 40,
            frames: 20,
            size: 64,
            target_size: [12.0, 20.0],
            velocity_range: [0.5, 2.5],
            texture_seed: 0,
            occlusion: false,
            clutter: 0.5,
            drift: 0.01,
            segment: [4, 8],
            noise: 0.0,
            flicker: 0.0,
            clutter_contrast: 0.12,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.target_size;
        let [vlo, vhi] = self.velocity_range;
        let ok = self.videos > 0
            && self.frames > 0
            && self.size >= 8
            && lo > 0.0
            && lo <= hi
            && hi < self.size as f64
            && vlo >= 0.0
            && vlo <= vhi
            && (0.0..=1.0).contains(&self.clutter)
            && (0.0..1.0).contains(&self.drift)
            && self.segment[0] > 0
            && self.segment[0] <= self.segment[1]
            && (0.0..=1.0).contains(&self.noise)
            && (0.0..=std::f64::consts::PI).contains(&self.flicker)
            && (0.0..=0.5).contains(&self.clutter_contrast);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent synthetic settings {self:?}")))
        }
    }
}

/// Smooth random color texture, a sum of plane waves whose phases may
/// advance over time.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    base: [f64; 3],
    waves: Vec<Wave>,
}

#[derive(Debug, Clone, PartialEq)]
struct Wave {
    k: [f64; 2],
    phase: f64,
    /// Phase change per frame.
    omega: f64,
    amp: [f64; 3],
}

impl Texture {
    pub fn random(rng: &mut impl Rng, waves: usize, freq: (f64, f64), contrast: f64) -> Self {
        let base = [(); 3].map(|_| rng.random_range(0.25..0.75));
        let waves = (0..waves)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let f = rng.random_range(freq.0..freq.1);
                let amp = [(); 3].map(|_| rng.random_range(-contrast..contrast));
                Wave {
                    k: [f * theta.cos(), f * theta.sin()],
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    omega: 0.0,
                    amp,
                }
            })
            .collect();
        Texture { base, waves }
    }

    pub fn flat(color: [f64; 3]) -> Self {
        Texture {
            base: color,
            waves: Vec::new(),
        }
    }

    /// Gives every wave a random phase speed in `[-max, max]`.
    pub fn animate(mut self, rng: &mut impl Rng, max: f64) -> Self {
        for w in &mut self.waves {
            w.omega = rng.random_range(-max..=max);
        }
        self
    }

    pub fn at(&self, x: f64, y: f64) -> [f64; 3] {
        self.at_time(x, y, 0)
    }

    pub fn at_time(&self, x: f64, y: f64, t: usize) -> [f64; 3] {
        let mut v = self.base;
        for w in &self.waves {
            let s = (w.k[0] * x + w.k[1] * y + w.phase + w.omega * t as f64).sin();
            for c in 0..3 {
                v[c] += w.amp[c] * s;
            }
        }
        v
    }
}

/// Everything needed to render one synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSpec {
    pub size: usize,
    pub target: (f64, f64),
    pub texture: Texture,
    pub background: Texture,
    /// Static textured rectangles drawn behind the target.
    pub distractors: Vec<(BBox, Texture)>,
    /// Target center in each frame.
    pub centers: Vec<(f64, f64)>,
    /// Relative brightness change per frame.
    pub drift: f64,
    /// Frames during which a bar covers the target, and its color.
    pub occluder: Option<(std::ops::Range<usize>, [f64; 3])>,
    /// Standard deviation and seed of additive pixel noise.
    pub noise: Option<(f64, u64)>,
}

/// A rendered synthetic video with exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
    pub occluded: Vec<bool>,
    pub tags: Vec<String>,
}

/// Centers after cumulative velocities from `start`.
pub fn integrate(start: (f64, f64), velocities: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut c = start;
    let mut out = vec![c];
    for v in velocities {
        c = (c.0 + v.0, c.1 + v.1);
        out.push(c);
    }
    out
}

fn inside(r: &BBox, x: f64, y: f64) -> bool {
    (x - r.cx).abs() < r.w / 2.0 && (y - r.cy).abs() < r.h / 2.0
}

/// Renders a video from its description.
pub fn render(spec: &VideoSpec) -> Result<(Vec<Frame>, Vec<BBox>, Vec<bool>)> {
    let n = spec.size;
    let (tw, th) = spec.target;
    let mut frames = Vec::with_capacity(spec.centers.len());
    let mut boxes = Vec::with_capacity(spec.centers.len());
    let mut occluded = Vec::with_capacity(spec.centers.len());
    let mut noise = spec
        .noise
        .map(|(sd, seed)| Normal::new(0.0, sd).map(|d| (d, ChaCha8Rng::seed_from_u64(seed))))
        .transpose()
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    for (t, &(cx, cy)) in spec.centers.iter().enumerate() {
        let target = BBox::new(cx, cy, tw, th);
        target.validate()?;
        let bar = spec
            .occluder
            .as_ref()
            .filter(|(span, _)| span.contains(&t))
            .map(|(_, color)| (BBox::new(cx, n as f64 / 2.0, 0.6 * tw, n as f64 * 2.0), *color));
        let gain = 1.0 + spec.drift * t as f64;
        let mut planes = Planes::zeros(3, n, n);
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let rgb = if let Some((_, color)) = bar.as_ref().filter(|(b, _)| inside(b, x, y)) {
                    *color
                } else if inside(&target, x, y) {
                    spec.texture.at(x - (cx - tw / 2.0), y - (cy - th / 2.0))
                } else if let Some((d, tex)) = spec.distractors.iter().rev().find(|(d, _)| inside(d, x, y)) {
                    tex.at(x - d.cx, y - d.cy)
                } else {
                    spec.background.at_time(x, y, t)
                };
                for (ch, v) in rgb.iter().enumerate() {
                    let e = noise.as_mut().map_or(0.0, |(d, rng)| d.sample(rng));
                    planes.set(ch, r, c, (v * gain + e).clamp(0.0, 1.0));
                }
            }
        }
        frames.push(Frame::new(planes)?);
        boxes.push(target);
        occluded.push(bar.is_some());
    }
    Ok((frames, boxes, occluded))
}

/// Piecewise-constant velocities that keep the target inside the frame.
fn plan_motion(rng: &mut impl Rng, cfg: &SynthConfig, target: (f64, f64)) -> Vec<(f64, f64)> {
    let n = cfg.size as f64;
    let (hx, hy) = (target.0 / 2.0 + 1.0, target.1 / 2.0 + 1.0);
    let mut c = (rng.random_range(hx..n - hx), rng.random_range(hy..n - hy));
    let mut centers = vec![c];
    let mut v = (0.0, 0.0);
    let mut left = 0;
    while centers.len() < cfg.frames {
        if left == 0 {
            let speed = rng.random_range(cfg.velocity_range[0]..=cfg.velocity_range[1]);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            v = (speed * dir.cos(), speed * dir.sin());
            left = rng.random_range(cfg.segment[0]..=cfg.segment[1]);
        }
        if !(hx..=n - hx).contains(&(c.0 + v.0)) {
            v.0 = -v.0;
        }
        if !(hy..=n - hy).contains(&(c.1 + v.1)) {
            v.1 = -v.1;
        }
        c = ((c.0 + v.0).clamp(hx, n - hx), (c.1 + v.1).clamp(hy, n - hy));
        centers.push(c);
        left -= 1;
    }
    centers
}

/// Generates a corpus of synthetic videos. Textures depend only on
/// `texture_seed`; everything else on `seed`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Vec<SyntheticVideo>> {
    cfg.validate()?;
    let n = cfg.size as f64;
    (0..cfg.videos)
        .map(|v| {
            let mut tex_rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed);
            tex_rng.set_stream(v as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(v as u64);
            let texture = Texture::random(&mut tex_rng, 8, (0.3, 1.4), 0.25);
            let target = (
                rng.random_range(cfg.target_size[0]..=cfg.target_size[1]),
                rng.random_range(cfg.target_size[0]..=cfg.target_size[1]),
            );
            let cluttered = rng.random_bool(cfg.clutter);
            let mut tags = Vec::new();
            let (background, distractors) = if cluttered {
                tags.push("clutter".to_string());
                let bg = Texture::random(&mut tex_rng, 10, (0.1, 0.9), cfg.clutter_contrast).animate(&mut rng, cfg.flicker);
                let distractors = (0..rng.random_range(2..=4))
                    .map(|_| {
                        let w = rng.random_range(cfg.target_size[0]..=cfg.target_size[1]);
                        let h = rng.random_range(cfg.target_size[0]..=cfg.target_size[1]);
                        let b = BBox::new(rng.random_range(0.0..n), rng.random_range(0.0..n), w, h);
                        (b, Texture::random(&mut tex_rng, 6, (0.3, 1.4), 0.2))
                    })
                    .collect();
                (bg, distractors)
            } else {
                tags.push("flat".to_string());
                (Texture::flat([(); 3].map(|_| tex_rng.random_range(0.2..0.8))), Vec::new())
            };
            let drift = rng.random_range(-cfg.drift..=cfg.drift);
            if drift.abs() > 0.5 * cfg.drift && cfg.drift > 0.0 {
                tags.push("drift".to_string());
            }
            let centers = plan_motion(&mut rng, cfg, target);
            let occluder = (cfg.occlusion && v % 2 == 1 && cfg.frames >= 4).then(|| {
                let start = rng.random_range(cfg.frames / 3..=cfg.frames / 2);
                let len = rng.random_range(1..=3).min(cfg.frames - start);
                tags.push("occlusion".to_string());
                (start..start + len, [(); 3].map(|_| rng.random_range(0.0..1.0)))
            });
            let spec = VideoSpec {
                size: cfg.size,
                target,
                texture,
                background,
                distractors,
                centers,
                drift,
                occluder,
                noise: (cfg.noise > 0.0).then(|| (cfg.noise, rng.random())),
            };
            let (frames, boxes, occluded) = render(&spec)?;
            Ok(SyntheticVideo {
                id: format!("synth_{v:03}"),
                frames,
                boxes,
                occluded,
                tags,
            })
        })
        .collect()
}

/// Writes `<root>/<id>/frame_%06d.png`, the ground truth and the tags.
pub fn write_synthetic(root: &Path, videos: &[SyntheticVideo]) -> Result<()> {
    for v in videos {
        let dir = root.join(&v.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, f) in v.frames.iter().enumerate() {
            save_frame(&dir.join(format!("frame_{i:06}.png")), f)?;
        }
        write_boxes(&dir.join(GT_FILE), &v.boxes)?;
        let tags = dir.join(TAGS_FILE);
        std::fs::write(&tags, format!("{}\n", v.tags.join(","))).map_err(|e| Error::io(&tags, e))?;
    }
    Ok(())
}

/// Scenario tags of a generated video directory (empty when absent).
pub fn read_tags(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(TAGS_FILE);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect())
}
