//! Inputs shared by the benchmarks.

use ludt_core::imgproc::{BBox, Frame};
use ludt_core::Planes;

/// A smooth textured color frame with a brighter square at `target`.
pub fn textured_frame(size: usize, target: BBox, phase: f64) -> Frame {
    let planes = Planes::from_fn(3, size, size, |c, r, col| {
        let (x, y) = (col as f64, r as f64);
        let inside = (x - target.cx).abs() < target.w / 2.0 && (y - target.cy).abs() < target.h / 2.0;
        let base = 0.5 + 0.2 * (0.11 * x + 0.07 * y + phase + c as f64).sin();
        if inside {
            (base + 0.3 * (0.9 * x - 0.6 * y).cos()).clamp(0.0, 1.0)
        } else {
            base
        }
    });
    Frame::new(planes).expect("finite frame")
}
