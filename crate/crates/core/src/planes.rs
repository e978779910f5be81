use crate::error::{Error, Result};
use crate::spectral::RealPlane;

/// A stack of equally sized real planes, stored channel-major
/// (`[channel][row][col]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// An image region fed to the feature extractor.
pub type Patch = Planes;

/// Output of the feature extractor.
pub type FeatureMap = Planes;

impl Planes {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty planes");
        Planes {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "planes must be non-empty, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::dims(channels * height * width, data.len()));
        }
        Ok(Planes {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut p = Self::zeros(channels, height, width);
        let mut i = 0;
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    p.data[i] = f(c, r, col);
                    i += 1;
                }
            }
        }
        p
    }

    /// Stacks single planes; all must share the same dims.
    pub fn from_planes(planes: &[RealPlane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidInput("no planes to stack".into()))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.dims() != (h, w) {
                return Err(Error::dims(format!("{h}x{w}"), format!("{:?}", p.dims())));
            }
            data.extend_from_slice(p.data());
        }
        Self::from_vec(planes.len(), h, w, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
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

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    pub fn to_plane(&self, c: usize) -> RealPlane {
        RealPlane::from_raw(self.height, self.width, self.channel(c).to_vec())
    }

    pub fn to_planes(&self) -> Vec<RealPlane> {
        (0..self.channels).map(|c| self.to_plane(c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Circular shift of every channel; see [`RealPlane::circshift`].
    pub fn circshift(&self, dr: isize, dc: isize) -> Self {
        let shifted: Vec<RealPlane> = self
            .to_planes()
            .iter()
            .map(|p| p.circshift(dr, dc))
            .collect();
        Self::from_planes(&shifted).expect("shape preserved")
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Planes) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}
