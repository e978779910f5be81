//! Unsupervised correlation-filter tracking with a learned shallow feature
//! extractor.

pub mod data;
pub mod dcf;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod imgproc;
pub mod planes;
pub mod spectral;
pub mod tracker;
pub mod unsup;
mod winograd;

pub use error::{Error, Result};
pub use planes::{FeatureMap, Patch, Planes};
pub use spectral::{ComplexPlane, RealPlane};
