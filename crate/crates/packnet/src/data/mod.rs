//! Dataset ingestion for monocular sequences — images, calibration, sparse
//! depth, and per-frame speed — plus a synthetic ray-traced scene whose
//! exact depth and trajectory make desk-scale verification possible.

mod disk;
mod synthetic;

pub use disk::{
    load_sample, read_depth, read_image, write_depth, AugmentConfig, DatasetConfig, DiskDataset,
};
pub use synthetic::{
    render_synthetic, BoxSpec, SceneConfig, SyntheticFrame, SyntheticScene, TrajectoryConfig,
};

use ndarray::{Array2, ArrayD};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;

/// An RGB raster `[3, H, W]` with values in `[0, 1]` and a capture time in
/// seconds. Frames are plain values and can be handed across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub pixels: ArrayD<f64>,
    pub timestamp: f64,
}

impl ImageFrame {
    pub fn new(pixels: ArrayD<f64>, timestamp: f64) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::shape("image frame", "[3,H,W]", shape));
        }
        Ok(Self { pixels, timestamp })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Per-pixel metric depth in meters. Zero marks pixels without a
/// measurement, so sparse ground truth and dense renders share one type.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Array2<f64>,
}

impl DepthMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(&bad) = values.iter().find(|&&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::invalid(format!(
                "depth values must be finite and >= 0, found {bad}"
            )));
        }
        Ok(Self { values })
    }

    /// Fraction of pixels carrying a measurement.
    pub fn coverage(&self) -> f64 {
        let n = self.values.len();
        if n == 0 {
            return 0.0;
        }
        self.values.iter().filter(|&&d| d > 0.0).count() as f64 / n as f64
    }
}

/// One training example: a target frame, its temporal neighbors with signed
/// time offsets, the shared camera model, and optional supervision signals.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub target: ImageFrame,
    /// Context frames as `(frame, dt)` where `dt` is the context timestamp
    /// minus the target timestamp; the previous neighbor carries a negative
    /// offset and the posterior a positive one.
    pub contexts: Vec<(ImageFrame, f64)>,
    pub intrinsics: CameraIntrinsics,
    /// Sparse ground-truth depth at the target frame, for evaluation only.
    pub gt_depth: Option<DepthMap>,
    /// Instantaneous speed at the target frame in m/s.
    pub speed: Option<f64>,
}

impl SequenceSample {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.target.height(), self.target.width());
        if self.contexts.is_empty() {
            return Err(Error::invalid("sample needs at least one context frame"));
        }
        for (frame, dt) in &self.contexts {
            if frame.height() != h || frame.width() != w {
                return Err(Error::shape(
                    "context frame",
                    format!("[3,{h},{w}]"),
                    frame.pixels.shape(),
                ));
            }
            if *dt == 0.0 || !dt.is_finite() {
                return Err(Error::invalid(format!(
                    "context dt must be nonzero and finite, got {dt}"
                )));
            }
        }
        if self.intrinsics.width != w || self.intrinsics.height != h {
            return Err(Error::invalid(format!(
                "intrinsics raster {}x{} does not match target {}x{}",
                self.intrinsics.width, self.intrinsics.height, w, h
            )));
        }
        if let Some(depth) = &self.gt_depth {
            if depth.values.dim() != (h, w) {
                return Err(Error::shape(
                    "ground-truth depth",
                    format!("[{h},{w}]"),
                    &[depth.values.dim().0, depth.values.dim().1][..],
                ));
            }
        }
        Ok(())
    }
}

/// Uniform read-only access to a sequence of training samples. Indexing is
/// dense over the usable samples (those with both temporal neighbors), so
/// `0..len()` always yields valid examples.
pub trait SampleSource: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> Result<SequenceSample>;
}
